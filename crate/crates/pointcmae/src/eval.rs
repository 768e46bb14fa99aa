//! Downstream evaluation: global shape descriptors from the encoder,
//! classification probes (linear head, small MLP head, or full
//! fine-tuning), and few-shot episodes.
//!
//! The global descriptor concatenates a channel-wise max pool and mean
//! pool over all patch tokens, giving a vector of length twice the model
//! width. Probe heads train with the same AdamW plus warmup-cosine recipe
//! as pre-training; for the frozen-head kinds a content hash of the
//! backbone taken before and after guards against accidental updates.

use crate::data::{augment_cloud, derive_seed, Augment, LabeledCloud};
use crate::error::{Error, Result};
use crate::geometry::{group_and_center, normalize_cloud, PointCloud};
use crate::model::{add_linear, embed_patches, encode, linear_fwd, pos_embed, ModelConfig};
use crate::tensor::{ParamStore, Tape, TensorId};
use crate::training::{lr_at, AdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const PROBE_SHUFFLE_TAG: u64 = 0x5052_4f42;
const EPISODE_TAG: u64 = 0x4550_4953;
const POSE_TAG: u64 = 0x504f_5345;

/// How the classifier sits on top of the pre-trained backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    /// Backbone and head both train.
    Full,
    /// Frozen backbone, single affine layer.
    MlpLinear,
    /// Frozen backbone, two hidden layers of 256 with GELU.
    Mlp3,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Full => "full",
            ProbeKind::MlpLinear => "mlp-linear",
            ProbeKind::Mlp3 => "mlp-3",
        }
    }
}

/// Classification training recipe shared by probes and fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            batch_size: 32,
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_epochs: 10,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// Shortened recipe for desk-scale experiments.
    pub fn quick(epochs: usize) -> Self {
        ProbeConfig {
            epochs,
            warmup_epochs: (epochs / 10).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("probe epochs and batch_size must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "probe warmup ({}) must end before training does ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(Error::config("probe learning rates are inconsistent"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("probe weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Hex SHA-256 over parameter names, shapes and value bits, in store
/// order. Identical stores hash identically; any drift shows up.
pub fn store_hash(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for p in store.iter() {
        h.update(p.name.as_bytes());
        h.update((p.rows as u64).to_le_bytes());
        h.update((p.cols as u64).to_le_bytes());
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Encoder tokens for a cloud with nothing masked, pooled into a global
/// descriptor node of shape `[1, 2 * dim]` (max pool first, mean pool
/// second).
pub fn feature_node(
    tape: &mut Tape<f32>,
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    cloud: &PointCloud,
) -> Result<TensorId> {
    let normalized = normalize_cloud(cloud);
    let patches = group_and_center(&normalized.points, cfg.n_patches, cfg.patch_size, 0)?;
    let tok = embed_patches(tape, store, cfg, &patches)?;
    let pos = pos_embed(tape, store, &patches.centers)?;
    let x = tape.add(tok, pos)?;
    let h = encode(tape, store, cfg, "encoder", x)?;
    let maxp = tape.max_pool_rows(h, cfg.n_patches)?;
    let ones = tape.leaf(
        vec![1.0 / cfg.n_patches as f32; cfg.n_patches],
        1,
        cfg.n_patches,
    )?;
    let meanp = tape.matmul(ones, h)?;
    tape.concat_cols(maxp, meanp)
}

/// Global descriptor values for one cloud (throwaway tape, no gradients
/// consumed).
pub fn global_feature(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    cloud: &PointCloud,
) -> Result<Vec<f32>> {
    let mut tape: Tape<f32> = Tape::new();
    let id = feature_node(&mut tape, store, cfg, cloud)?;
    Ok(tape.value(id)?.to_vec())
}

/// Descriptors for a whole dataset, in order.
pub fn extract_features(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    clouds: &[LabeledCloud],
) -> Result<Vec<Vec<f32>>> {
    clouds
        .iter()
        .map(|lc| global_feature(store, cfg, &lc.cloud))
        .collect()
}

/// Give every cloud one drawn pose from the augmentation distribution the
/// backbone saw during pre-training. Evaluating on the generator's
/// canonical orientations instead would reward features that memorize the
/// axis alignment rather than the shape.
pub fn pose_dataset(data: &mut [LabeledCloud], aug: Augment, seed: u64) {
    for (i, lc) in data.iter_mut().enumerate() {
        let s = derive_seed(seed, &[POSE_TAG, i as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        lc.cloud = augment_cloud(&lc.cloud, aug, &mut rng);
    }
}

/// Per-class split: the first `fraction` of each class's clouds train,
/// the rest test.
pub fn split_per_class(
    data: &[LabeledCloud],
    fraction: f64,
) -> Result<(Vec<LabeledCloud>, Vec<LabeledCloud>)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::arg(format!("train fraction {fraction} outside (0, 1)")));
    }
    let classes = data.iter().map(|lc| lc.label).max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let members: Vec<&LabeledCloud> = data.iter().filter(|lc| lc.label == c).collect();
        let n_train = ((members.len() as f64 * fraction).floor() as usize)
            .clamp(1, members.len().saturating_sub(1));
        for (i, lc) in members.iter().enumerate() {
            if i < n_train {
                train.push((*lc).clone());
            } else {
                test.push((*lc).clone());
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::arg("split produced an empty train or test set"));
    }
    Ok((train, test))
}

/// Per-dimension standardization fitted on one feature set and applied to
/// any other. Frozen-backbone probes fit it on the training split before
/// the head sees anything: a reconstruction-trained backbone can emit
/// features orders of magnitude smaller than a fresh head plus weight
/// decay can exploit, and this parameter-free rescaling removes that
/// handicap without adding capacity.
#[derive(Debug, Clone)]
pub struct FeatureScaler {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl FeatureScaler {
    pub fn fit(feats: &[Vec<f32>]) -> Result<Self> {
        if feats.is_empty() {
            return Err(Error::arg("cannot fit a scaler on zero features"));
        }
        let n = feats.len() as f64;
        let d = feats[0].len();
        let mut mean = vec![0.0f64; d];
        for f in feats {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v as f64 / n;
            }
        }
        let mut var = vec![0.0f64; d];
        for f in feats {
            for (j, &v) in f.iter().enumerate() {
                let c = v as f64 - mean[j];
                var[j] += c * c / n;
            }
        }
        Ok(FeatureScaler {
            mean: mean.iter().map(|&m| m as f32).collect(),
            inv_std: var.iter().map(|&v| (1.0 / (v.sqrt() + 1e-6)) as f32).collect(),
        })
    }

    pub fn apply(&self, feats: &[Vec<f32>]) -> Vec<Vec<f32>> {
        feats
            .iter()
            .map(|f| {
                f.iter()
                    .zip(self.mean.iter().zip(&self.inv_std))
                    .map(|(&v, (&m, &s))| (v - m) * s)
                    .collect()
            })
            .collect()
    }
}

fn add_head_params(
    store: &mut ParamStore<f32>,
    kind: ProbeKind,
    in_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        ProbeKind::MlpLinear | ProbeKind::Full => {
            add_linear(store, &mut rng, "probe.fc", in_dim, classes)?;
        }
        ProbeKind::Mlp3 => {
            add_linear(store, &mut rng, "probe.fc1", in_dim, 256)?;
            add_linear(store, &mut rng, "probe.fc2", 256, 256)?;
            add_linear(store, &mut rng, "probe.fc3", 256, classes)?;
        }
    }
    Ok(())
}

fn head_logits(
    tape: &mut Tape<f32>,
    store: &ParamStore<f32>,
    kind: ProbeKind,
    x: TensorId,
) -> Result<TensorId> {
    match kind {
        ProbeKind::MlpLinear | ProbeKind::Full => linear_fwd(tape, store, "probe.fc", x),
        ProbeKind::Mlp3 => {
            let h1 = linear_fwd(tape, store, "probe.fc1", x)?;
            let h1 = tape.gelu(h1)?;
            let h2 = linear_fwd(tape, store, "probe.fc2", h1)?;
            let h2 = tape.gelu(h2)?;
            linear_fwd(tape, store, "probe.fc3", h2)
        }
    }
}

fn feature_matrix(tape: &mut Tape<f32>, feats: &[Vec<f32>], idx: &[usize]) -> Result<TensorId> {
    let cols = feats[idx[0]].len();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(&feats[i]);
    }
    tape.leaf(data, idx.len(), cols)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Train a classifier head on fixed feature vectors (no backbone
/// involved). Returns the trained head store.
pub fn train_head_on_features(
    kind: ProbeKind,
    feats: &[Vec<f32>],
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    if kind == ProbeKind::Full {
        return Err(Error::arg(
            "full fine-tuning needs the backbone; use train_probe",
        ));
    }
    check_labels(labels, classes, feats.len())?;
    let in_dim = feats[0].len();
    let mut head = ParamStore::new();
    add_head_params(&mut head, kind, in_dim, classes, cfg.seed)?;
    let mut opt = AdamW::new(&head, 0.9, 0.999, 1e-8, cfg.weight_decay);

    let n = feats.len();
    let spe = (n as u64).div_ceil(cfg.batch_size as u64);
    let total = cfg.epochs as u64 * spe;
    let warmup = cfg.warmup_epochs as u64 * spe;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let shuffle_seed = derive_seed(cfg.seed, &[PROBE_SHUFFLE_TAG, epoch as u64]);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(step, total, warmup, cfg.base_lr, cfg.min_lr);
            let mut tape: Tape<f32> = Tape::new();
            let x = feature_matrix(&mut tape, feats, batch)?;
            let logits = head_logits(&mut tape, &head, kind, x)?;
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = tape.cross_entropy(logits, &targets)?;
            tape.backward(loss)?;
            tape.apply_param_grads(&mut head)?;
            opt.step(&mut head, lr)?;
            head.zero_grads();
            step += 1;
        }
    }
    Ok(head)
}

/// Fraction of feature vectors the head classifies correctly.
pub fn head_accuracy(
    head: &ParamStore<f32>,
    kind: ProbeKind,
    feats: &[Vec<f32>],
    labels: &[usize],
) -> Result<f64> {
    if feats.is_empty() || feats.len() != labels.len() {
        return Err(Error::arg("head_accuracy: empty or mismatched inputs"));
    }
    let mut tape: Tape<f32> = Tape::new();
    let idx: Vec<usize> = (0..feats.len()).collect();
    let x = feature_matrix(&mut tape, feats, &idx)?;
    let logits = head_logits(&mut tape, head, kind, x)?;
    let values = tape.value(logits)?;
    let classes = tape.shape(logits)?[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&values[i * classes..(i + 1) * classes]) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn check_labels(labels: &[usize], classes: usize, expect_len: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::arg(format!(
            "classification needs at least 2 classes, got {classes}"
        )));
    }
    if labels.len() != expect_len || labels.is_empty() {
        return Err(Error::arg("labels and examples must align and be non-empty"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::arg(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Result of one probe run.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub kind: ProbeKind,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Backbone content hash before and after; equal for frozen kinds.
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Train a classifier on top of `backbone` and score it. Frozen kinds
/// (`MlpLinear`, `Mlp3`) extract features once and never touch the
/// backbone, which is verified by hashing; `Full` fine-tunes a private
/// copy end to end.
pub fn train_probe(
    backbone: &ParamStore<f32>,
    model_cfg: &ModelConfig,
    probe_cfg: &ProbeConfig,
    kind: ProbeKind,
    train: &[LabeledCloud],
    test: &[LabeledCloud],
    classes: usize,
) -> Result<ProbeOutcome> {
    probe_cfg.validate()?;
    model_cfg.validate()?;
    let train_labels: Vec<usize> = train.iter().map(|lc| lc.label).collect();
    let test_labels: Vec<usize> = test.iter().map(|lc| lc.label).collect();
    check_labels(&train_labels, classes, train.len())?;
    check_labels(&test_labels, classes, test.len())?;

    let hash_before = store_hash(backbone);
    match kind {
        ProbeKind::MlpLinear | ProbeKind::Mlp3 => {
            let raw_train = extract_features(backbone, model_cfg, train)?;
            let scaler = FeatureScaler::fit(&raw_train)?;
            let train_feats = scaler.apply(&raw_train);
            let test_feats = scaler.apply(&extract_features(backbone, model_cfg, test)?);
            let head =
                train_head_on_features(kind, &train_feats, &train_labels, classes, probe_cfg)?;
            let train_accuracy = head_accuracy(&head, kind, &train_feats, &train_labels)?;
            let test_accuracy = head_accuracy(&head, kind, &test_feats, &test_labels)?;
            let hash_after = store_hash(backbone);
            if hash_after != hash_before {
                return Err(Error::contract(
                    "frozen-backbone probe mutated the backbone",
                ));
            }
            Ok(ProbeOutcome {
                kind,
                train_accuracy,
                test_accuracy,
                backbone_hash_before: hash_before,
                backbone_hash_after: hash_after,
            })
        }
        ProbeKind::Full => {
            let mut store = backbone.clone_fresh();
            add_head_params(&mut store, kind, 2 * model_cfg.dim, classes, probe_cfg.seed)?;
            let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, probe_cfg.weight_decay);
            let n = train.len();
            let spe = (n as u64).div_ceil(probe_cfg.batch_size as u64);
            let total = probe_cfg.epochs as u64 * spe;
            let warmup = probe_cfg.warmup_epochs as u64 * spe;
            let mut step = 0u64;
            for epoch in 0..probe_cfg.epochs {
                let mut order: Vec<usize> = (0..n).collect();
                let shuffle_seed =
                    derive_seed(probe_cfg.seed, &[PROBE_SHUFFLE_TAG, epoch as u64]);
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
                for batch in order.chunks(probe_cfg.batch_size) {
                    let lr = lr_at(step, total, warmup, probe_cfg.base_lr, probe_cfg.min_lr);
                    let mut tape: Tape<f32> = Tape::new();
                    let mut rows = Vec::with_capacity(batch.len());
                    for &i in batch {
                        rows.push(feature_node(&mut tape, &store, model_cfg, &train[i].cloud)?);
                    }
                    let mut x = rows[0];
                    for &r in &rows[1..] {
                        x = tape.concat_rows(x, r)?;
                    }
                    let logits = head_logits(&mut tape, &store, kind, x)?;
                    let targets: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
                    let loss = tape.cross_entropy(logits, &targets)?;
                    tape.backward(loss)?;
                    tape.apply_param_grads(&mut store)?;
                    opt.step(&mut store, lr)?;
                    store.zero_grads();
                    step += 1;
                }
            }
            let score = |set: &[LabeledCloud], labels: &[usize]| -> Result<f64> {
                let mut correct = 0usize;
                for (lc, &label) in set.iter().zip(labels) {
                    let mut tape: Tape<f32> = Tape::new();
                    let f = feature_node(&mut tape, &store, model_cfg, &lc.cloud)?;
                    let logits = head_logits(&mut tape, &store, kind, f)?;
                    if argmax(tape.value(logits)?) == label {
                        correct += 1;
                    }
                }
                Ok(correct as f64 / set.len() as f64)
            };
            let train_accuracy = score(train, &train_labels)?;
            let test_accuracy = score(test, &test_labels)?;
            // Hash of the fine-tuned copy, so callers can see it moved.
            let hash_after = store_hash(&store);
            Ok(ProbeOutcome {
                kind,
                train_accuracy,
                test_accuracy,
                backbone_hash_before: hash_before,
                backbone_hash_after: hash_after,
            })
        }
    }
}

/// Few-shot episode layout: `way` classes, `shot` support examples each,
/// a fixed number of query examples each, averaged over several episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FewShotConfig {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            way: 5,
            shot: 10,
            queries_per_class: 20,
            episodes: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FewShotResult {
    pub way: usize,
    pub shot: usize,
    pub per_episode: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation across episodes (0 for one episode).
    pub std_accuracy: f64,
}

/// Run few-shot classification over a labeled pool: per episode, draw
/// `way` classes and disjoint support/query examples, train a linear head
/// on support features, and score the queries. Features are extracted
/// once for the whole pool.
pub fn run_few_shot(
    backbone: &ParamStore<f32>,
    model_cfg: &ModelConfig,
    probe_cfg: &ProbeConfig,
    fs: &FewShotConfig,
    pool: &[LabeledCloud],
) -> Result<FewShotResult> {
    probe_cfg.validate()?;
    if fs.way < 2 || fs.shot == 0 || fs.queries_per_class == 0 || fs.episodes == 0 {
        return Err(Error::arg(
            "few-shot needs way >= 2, shot >= 1, queries >= 1, episodes >= 1",
        ));
    }
    if pool.is_empty() {
        return Err(Error::arg("few-shot pool is empty"));
    }
    let classes = pool.iter().map(|lc| lc.label).max().unwrap() + 1;
    if classes < fs.way {
        return Err(Error::arg(format!(
            "{}-way episodes need at least {} classes, pool has {classes}",
            fs.way, fs.way
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, lc) in pool.iter().enumerate() {
        by_class[lc.label].push(i);
    }
    let need = fs.shot + fs.queries_per_class;
    if let Some((c, v)) = by_class.iter().enumerate().find(|(_, v)| v.len() < need) {
        return Err(Error::arg(format!(
            "class {c} has {} examples, episodes need {need}",
            v.len()
        )));
    }

    let feats = extract_features(backbone, model_cfg, pool)?;
    let mut per_episode = Vec::with_capacity(fs.episodes);
    for e in 0..fs.episodes {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(fs.seed, &[EPISODE_TAG, e as u64]));
        let chosen = rand::seq::index::sample(&mut rng, classes, fs.way).into_vec();
        let mut support_idx = Vec::with_capacity(fs.way * fs.shot);
        let mut support_labels = Vec::with_capacity(fs.way * fs.shot);
        let mut query_idx = Vec::with_capacity(fs.way * fs.queries_per_class);
        let mut query_labels = Vec::with_capacity(fs.way * fs.queries_per_class);
        for (episode_label, &class) in chosen.iter().enumerate() {
            let picks =
                rand::seq::index::sample(&mut rng, by_class[class].len(), need).into_vec();
            for (j, &p) in picks.iter().enumerate() {
                let pool_idx = by_class[class][p];
                if j < fs.shot {
                    support_idx.push(pool_idx);
                    support_labels.push(episode_label);
                } else {
                    query_idx.push(pool_idx);
                    query_labels.push(episode_label);
                }
            }
        }
        let support_raw: Vec<Vec<f32>> =
            support_idx.iter().map(|&i| feats[i].clone()).collect();
        let query_raw: Vec<Vec<f32>> = query_idx.iter().map(|&i| feats[i].clone()).collect();
        let scaler = FeatureScaler::fit(&support_raw)?;
        let support_feats = scaler.apply(&support_raw);
        let query_feats = scaler.apply(&query_raw);
        let mut episode_cfg = probe_cfg.clone();
        episode_cfg.seed = derive_seed(probe_cfg.seed, &[EPISODE_TAG, e as u64]);
        let head = train_head_on_features(
            ProbeKind::MlpLinear,
            &support_feats,
            &support_labels,
            fs.way,
            &episode_cfg,
        )?;
        per_episode.push(head_accuracy(
            &head,
            ProbeKind::MlpLinear,
            &query_feats,
            &query_labels,
        )?);
    }
    let mean = per_episode.iter().sum::<f64>() / per_episode.len() as f64;
    let std = if per_episode.len() > 1 {
        let var = per_episode
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (per_episode.len() - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    Ok(FewShotResult {
        way: fs.way,
        shot: fs.shot,
        per_episode,
        mean_accuracy: mean,
        std_accuracy: std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, DatasetSpec};
    use crate::model::init_params;

    fn micro_setup() -> (ModelConfig, ParamStore<f32>, Vec<LabeledCloud>) {
        let cfg = ModelConfig::micro();
        let store = init_params(&cfg, 11).unwrap();
        let data = make_dataset(&DatasetSpec {
            clouds_per_class: 4,
            points_per_cloud: 64,
            seed: 5,
        })
        .unwrap();
        (cfg, store, data)
    }

    fn blob_features(
        n_per_class: usize,
        dim: usize,
        sep: f32,
        seed: u64,
    ) -> (Vec<Vec<f32>>, Vec<usize>) {
        use rand::RngExt;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2usize {
            let center = if class == 0 { -sep } else { sep };
            for _ in 0..n_per_class {
                let v: Vec<f32> = (0..dim)
                    .map(|_| center + rng.random_range(-0.5..0.5))
                    .collect();
                feats.push(v);
                labels.push(class);
            }
        }
        (feats, labels)
    }

    #[test]
    fn feature_has_pooled_layout() {
        let (cfg, store, data) = micro_setup();
        let f = global_feature(&store, &cfg, &data[0].cloud).unwrap();
        assert_eq!(f.len(), 2 * cfg.dim);
        assert!(f.iter().all(|v| v.is_finite()));
        // Channel-wise max pool dominates the mean pool entry by entry.
        for c in 0..cfg.dim {
            assert!(f[c] >= f[cfg.dim + c] - 1e-6);
        }
    }

    #[test]
    fn features_are_deterministic() {
        let (cfg, store, data) = micro_setup();
        let a = global_feature(&store, &cfg, &data[3].cloud).unwrap();
        let b = global_feature(&store, &cfg, &data[3].cloud).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn linear_head_separates_blobs() {
        let (feats, labels) = blob_features(20, 6, 2.0, 3);
        let cfg = ProbeConfig {
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 8,
            ..ProbeConfig::default()
        };
        let head = train_head_on_features(ProbeKind::MlpLinear, &feats, &labels, 2, &cfg).unwrap();
        let acc = head_accuracy(&head, ProbeKind::MlpLinear, &feats, &labels).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn mlp_head_separates_blobs() {
        let (feats, labels) = blob_features(12, 4, 2.0, 9);
        let cfg = ProbeConfig {
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 8,
            ..ProbeConfig::default()
        };
        let head = train_head_on_features(ProbeKind::Mlp3, &feats, &labels, 2, &cfg).unwrap();
        let acc = head_accuracy(&head, ProbeKind::Mlp3, &feats, &labels).unwrap();
        assert!(acc >= 0.9, "mlp head accuracy {acc}");
    }

    #[test]
    fn single_class_pools_are_rejected() {
        let (feats, _) = blob_features(4, 3, 1.0, 1);
        let labels = vec![0usize; feats.len()];
        let cfg = ProbeConfig::quick(5);
        assert!(matches!(
            train_head_on_features(ProbeKind::MlpLinear, &feats, &labels, 1, &cfg),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let (feats, mut labels) = blob_features(4, 3, 1.0, 1);
        labels[0] = 7;
        let cfg = ProbeConfig::quick(5);
        assert!(train_head_on_features(ProbeKind::MlpLinear, &feats, &labels, 2, &cfg).is_err());
    }

    #[test]
    fn frozen_probe_leaves_backbone_untouched() {
        let (cfg, store, data) = micro_setup();
        let (train, test) = data.split_at(24);
        let probe_cfg = ProbeConfig::quick(4);
        let out = train_probe(
            &store,
            &cfg,
            &probe_cfg,
            ProbeKind::MlpLinear,
            train,
            test,
            8,
        )
        .unwrap();
        assert_eq!(out.backbone_hash_before, out.backbone_hash_after);
        assert!((0.0..=1.0).contains(&out.test_accuracy));
        assert!((0.0..=1.0).contains(&out.train_accuracy));
    }

    #[test]
    fn full_fine_tuning_moves_the_backbone_copy() {
        let (cfg, store, data) = micro_setup();
        let (train, test) = data.split_at(24);
        let probe_cfg = ProbeConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 8,
            ..ProbeConfig::default()
        };
        let before = store_hash(&store);
        let out =
            train_probe(&store, &cfg, &probe_cfg, ProbeKind::Full, train, test, 8).unwrap();
        assert_ne!(out.backbone_hash_before, out.backbone_hash_after);
        // The original store itself is untouched.
        assert_eq!(store_hash(&store), before);
    }

    #[test]
    fn few_shot_runs_and_reports_spread() {
        let (cfg, store, data) = micro_setup();
        let probe_cfg = ProbeConfig::quick(5);
        let fs = FewShotConfig {
            way: 3,
            shot: 1,
            queries_per_class: 2,
            episodes: 3,
            seed: 2,
        };
        let res = run_few_shot(&store, &cfg, &probe_cfg, &fs, &data).unwrap();
        assert_eq!(res.per_episode.len(), 3);
        assert!(res.per_episode.iter().all(|a| (0.0..=1.0).contains(a)));
        let mean = res.per_episode.iter().sum::<f64>() / 3.0;
        assert!((res.mean_accuracy - mean).abs() < 1e-12);
        assert!(res.std_accuracy >= 0.0);
        // Deterministic across calls.
        let res2 = run_few_shot(&store, &cfg, &probe_cfg, &fs, &data).unwrap();
        assert_eq!(res.per_episode, res2.per_episode);
    }

    #[test]
    fn few_shot_validates_pool_depth() {
        let (cfg, store, data) = micro_setup();
        let probe_cfg = ProbeConfig::quick(5);
        let fs = FewShotConfig {
            way: 3,
            shot: 3,
            queries_per_class: 2,
            episodes: 1,
            seed: 0,
        };
        // 4 clouds per class cannot cover shot 3 + queries 2.
        assert!(run_few_shot(&store, &cfg, &probe_cfg, &fs, &data).is_err());
    }

    #[test]
    fn store_hash_tracks_content() {
        let (_, store, _) = micro_setup();
        let h1 = store_hash(&store);
        let mut copy = store.clone_fresh();
        assert_eq!(h1, store_hash(&copy));
        copy.get_mut(0).unwrap().value[0] += 1.0;
        assert_ne!(h1, store_hash(&copy));
    }
}
